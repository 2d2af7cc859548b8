use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match questioner_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    if let Err(e) = questioner_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(questioner_cli::exit_code(&e));
    }
}
