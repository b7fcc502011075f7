fn main() {
    std::process::exit(tkgmem::cli::run(std::env::args_os()));
}
