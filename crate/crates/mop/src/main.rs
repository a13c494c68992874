use clap::Parser;
use mop::cli::Cli;

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    if let Err(e) = mop::commands::run(cli) {
        log::error!("{e}");
        eprintln!("{}", e.to_json());
        std::process::exit(e.exit_code());
    }
}
