fn main() {
    std::process::exit(spectral_tf_cli::run(std::env::args_os()));
}
