fn main() -> std::process::ExitCode {
    drivestack::cli::main()
}
