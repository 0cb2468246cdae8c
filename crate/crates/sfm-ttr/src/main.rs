fn main() {
    std::process::exit(sfm_ttr::cli::run(std::env::args_os()));
}
