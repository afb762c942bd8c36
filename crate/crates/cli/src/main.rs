use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("DIABLO_LOG", "warn"))
        .init();
    let cli = diablo_cli::Cli::parse();
    let code = match diablo_cli::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            diablo_cli::exit_code_for(&e)
        }
    };
    std::process::exit(code);
}
