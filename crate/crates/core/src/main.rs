fn main() {
    env_logger::init();
    std::process::exit(sphere_she::cli::run(std::env::args_os()));
}
