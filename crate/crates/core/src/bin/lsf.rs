fn main() {
    std::process::exit(lsf::cli::run(std::env::args_os()));
}
