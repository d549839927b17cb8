fn main() {
    std::process::exit(splatgroup::cli::run(std::env::args_os()));
}
