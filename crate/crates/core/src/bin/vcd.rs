fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VCD_LOG_LEVEL", "info")).init();
    std::process::exit(vcd_core::cli::run(std::env::args_os()));
}
