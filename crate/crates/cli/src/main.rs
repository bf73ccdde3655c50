use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(viewpoint_cli::LOG_ENV, "warn")).init();
    ExitCode::from(viewpoint_cli::run(std::env::args_os()))
}
