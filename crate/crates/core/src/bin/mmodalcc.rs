fn main() -> std::process::ExitCode {
    mmodalcc::cli::main_with(std::env::args_os())
}
