fn main() -> std::process::ExitCode {
    refineir_service::cli::main()
}
