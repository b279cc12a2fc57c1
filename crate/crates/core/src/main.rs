fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CAU_LOG", "warn")).init();
    std::process::exit(cau::cli::main_with(std::env::args_os()));
}
