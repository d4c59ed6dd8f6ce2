fn main() -> std::process::ExitCode {
    me_mhacl_cli::main_with_args(std::env::args_os())
}
