fn main() {
    std::process::exit(cimdl::cli::run(std::env::args_os()));
}
