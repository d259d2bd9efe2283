fn main() {
    std::process::exit(stratperm_cli::main_with_args(std::env::args_os()));
}
