fn main() -> std::process::ExitCode {
    oct_adapt::cli::main()
}
