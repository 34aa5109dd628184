fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    distillforge::cli::init_threads_from_env();
    std::process::exit(distillforge::cli::run_command(std::env::args_os()));
}
