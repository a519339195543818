fn main() -> std::process::ExitCode {
    coalrec::cli::main_with(std::env::args_os())
}
