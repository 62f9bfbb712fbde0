fn main() {
    std::process::exit(wskf::cli::run(std::env::args_os()));
}
