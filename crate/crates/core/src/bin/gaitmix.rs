fn main() {
    std::process::exit(gaitmix::cli::run(std::env::args_os()));
}
