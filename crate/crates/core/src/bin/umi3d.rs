fn main() {
    std::process::exit(umi3d::cli::main_cli(std::env::args_os()));
}
