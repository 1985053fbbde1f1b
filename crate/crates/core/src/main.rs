fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let outcome = cptlaw::cli::run(std::env::args_os());
    for path in &outcome.report_paths {
        eprintln!("wrote {}", path.display());
    }
    std::process::exit(outcome.exit_code);
}
