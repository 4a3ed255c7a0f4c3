fn main() -> std::process::ExitCode {
    polymer_core::cli::main()
}
