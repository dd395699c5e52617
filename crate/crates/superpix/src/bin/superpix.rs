fn main() {
    std::process::exit(superpix::cli::run());
}
