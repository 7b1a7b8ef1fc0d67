use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match ssg_cli::run_from(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(clap_err) = err.downcast_ref::<clap::Error>() {
                if !clap_err.use_stderr() {
                    // --help and --version
                    let _ = clap_err.print();
                    return ExitCode::SUCCESS;
                }
                let first = clap_err.to_string();
                let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
                eprintln!("error[usage]: {first}");
                return ExitCode::from(2);
            }
            eprintln!("{}", ssg_cli::error_line(&err));
            ExitCode::FAILURE
        }
    }
}
