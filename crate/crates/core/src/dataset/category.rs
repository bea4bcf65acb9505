use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six annotated land-cover classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LandCover {
    LowVegetation,
    NvgSurface,
    Tree,
    Water,
    Building,
    Playground,
}

/// One-hot semantic input width: six classes plus unlabeled.
pub const SEMANTIC_CHANNELS: usize = 7;

impl LandCover {
    pub const ALL: [LandCover; 6] = [
        LandCover::LowVegetation,
        LandCover::NvgSurface,
        LandCover::Tree,
        LandCover::Water,
        LandCover::Building,
        LandCover::Playground,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LandCover::LowVegetation => "low_vegetation",
            LandCover::NvgSurface => "nvg_surface",
            LandCover::Tree => "tree",
            LandCover::Water => "water",
            LandCover::Building => "building",
            LandCover::Playground => "playground",
        }
    }

    /// Palette color of the class in rendered semantic maps. Unlabeled
    /// (unchanged) pixels are black.
    pub fn color(self) -> [u8; 3] {
        match self {
            LandCover::LowVegetation => [0, 128, 0],
            LandCover::NvgSurface => [128, 128, 128],
            LandCover::Tree => [0, 255, 0],
            LandCover::Water => [0, 0, 255],
            LandCover::Building => [128, 0, 0],
            LandCover::Playground => [255, 0, 0],
        }
    }

    /// One-hot channel of the nearest palette color; channel 6 is unlabeled.
    pub fn channel_of(pixel: [u8; 3]) -> usize {
        let dist = |c: [u8; 3]| -> i32 {
            c.iter()
                .zip(pixel)
                .map(|(&a, b)| (i32::from(a) - i32::from(b)).pow(2))
                .sum()
        };
        let mut best = (dist([0, 0, 0]), 6);
        for (i, class) in LandCover::ALL.iter().enumerate() {
            let d = dist(class.color());
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }
}

impl FromStr for LandCover {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LandCover::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Index(format!("unknown land-cover class `{s}`")))
    }
}

/// The label of an entry: no change, or a `from -> to` transition between
/// two distinct classes (30 ordered pairs).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChangeCategory {
    NoChange,
    Transition { from: LandCover, to: LandCover },
}

impl ChangeCategory {
    pub fn transition(from: LandCover, to: LandCover) -> Result<Self> {
        if from == to {
            return Err(Error::Index(format!("`{}` cannot change into itself", from.as_str())));
        }
        Ok(ChangeCategory::Transition { from, to })
    }

    pub fn is_change(&self) -> bool {
        !matches!(self, ChangeCategory::NoChange)
    }

    /// No-change first, then transitions in class order.
    pub fn all() -> Vec<ChangeCategory> {
        let mut v = vec![ChangeCategory::NoChange];
        for from in LandCover::ALL {
            for to in LandCover::ALL {
                if from != to {
                    v.push(ChangeCategory::Transition { from, to });
                }
            }
        }
        v
    }

    pub fn index(&self) -> usize {
        ChangeCategory::all()
            .iter()
            .position(|c| c == self)
            .expect("every category is enumerated")
    }
}

impl fmt::Display for ChangeCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChangeCategory::NoChange => f.write_str("no_change"),
            ChangeCategory::Transition { from, to } => write!(f, "{}->{}", from.as_str(), to.as_str()),
        }
    }
}

impl FromStr for ChangeCategory {
    type Err = Error;

    /// Accepts `no_change`, `from->to` and `from_to_to`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "no_change" {
            return Ok(ChangeCategory::NoChange);
        }
        let (a, b) = s
            .split_once("->")
            .or_else(|| s.split_once("_to_"))
            .ok_or_else(|| Error::Index(format!("unrecognized category `{s}`")))?;
        ChangeCategory::transition(a.parse()?, b.parse()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thirty_transitions_plus_no_change() {
        let all = ChangeCategory::all();
        assert_eq!(all.len(), 31);
        assert_eq!(all.iter().filter(|c| c.is_change()).count(), 30);
        assert_eq!(ChangeCategory::NoChange.index(), 0);
    }

    #[test]
    fn round_trips_through_strings() {
        for c in ChangeCategory::all() {
            assert_eq!(c.to_string().parse::<ChangeCategory>().unwrap(), c);
        }
        assert_eq!(
            "water_to_building".parse::<ChangeCategory>().unwrap(),
            ChangeCategory::transition(LandCover::Water, LandCover::Building).unwrap()
        );
        assert!("tree->tree".parse::<ChangeCategory>().is_err());
    }

    #[test]
    fn palette_channels() {
        assert_eq!(LandCover::channel_of([0, 0, 0]), 6);
        assert_eq!(LandCover::channel_of([0, 0, 250]), 3);
        assert_eq!(LandCover::channel_of(LandCover::Playground.color()), 5);
    }
}
