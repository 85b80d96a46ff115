fn main() -> std::process::ExitCode {
    grokking_lab::cli::main_with_args(std::env::args_os())
}
