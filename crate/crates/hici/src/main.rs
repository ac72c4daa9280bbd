fn main() -> std::process::ExitCode {
    hici::cli::main(std::env::args_os())
}
