fn main() {
    std::process::exit(ndf_rec::cli::run(std::env::args_os()));
}
