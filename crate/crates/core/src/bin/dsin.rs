fn main() -> std::process::ExitCode {
    dsin_core::cli::main()
}
