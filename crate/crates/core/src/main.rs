fn main() {
    std::process::exit(spde_reflect::cli::main_with(std::env::args_os()));
}
