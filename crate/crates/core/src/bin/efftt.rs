fn main() {
    std::process::exit(efftt::cli::main_with_args(std::env::args_os()));
}
