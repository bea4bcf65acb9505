//! Scores a handful of captions against their references and prints the
//! metric report as CSV.

use mmodalcc::metrics::{evaluate, EvalItem};

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn item(id: &str, hyp: &str, refs: &[&str], is_change: bool) -> EvalItem {
    EvalItem {
        id: id.into(),
        hypothesis: tokens(hyp),
        references: refs.iter().map(|r| tokens(r)).collect(),
        is_change,
    }
}

fn main() -> anyhow::Result<()> {
    let items = vec![
        item(
            "a",
            "a road has been built at the top",
            &["a road has been built at the top", "a new road appears at the top", "the top part now has a road", "a road was built at the top", "there is a new road at the top"],
            true,
        ),
        item(
            "b",
            "some trees were removed on the left",
            &["trees on the left were cut down", "the trees on the left have disappeared", "some trees were removed on the left side", "the left trees are gone", "trees were removed on the left"],
            true,
        ),
        item(
            "c",
            "a pond is added in the bottom right corner",
            &["a building appeared in the bottom right corner", "a house was built at the bottom right", "there is a new building at the bottom right", "a building is added in the bottom right corner", "a new house in the bottom right corner"],
            true,
        ),
        item("d", "no change", &["no change", "nothing has changed", "the scene is the same", "there is no change", "no difference"], false),
        item("e", "nothing has changed", &["no change", "nothing has changed", "the two images are the same", "there is no change", "no difference"], false),
    ];
    let report = evaluate(&items, None)?;
    print!("{}", report.to_csv());
    Ok(())
}
