fn main() {
    std::process::exit(aor::cli::run(std::env::args_os()));
}
