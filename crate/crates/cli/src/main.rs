fn main() {
    std::process::exit(wf_cli::run(std::env::args_os()));
}
