use clap::Parser;

use dna_core::cli::{execute, Cli, EXIT_USAGE};

fn main() {
    let level = std::env::var("DNA_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    let filter = match level.as_str() {
        "error" | "info" | "debug" => level.clone(),
        other => {
            eprintln!(
                "{}",
                serde_json::json!({ "error": { "kind": "config", "message": format!("DNA_LOG_LEVEL must be error, info or debug (got `{other}`)") } })
            );
            std::process::exit(EXIT_USAGE);
        }
    };
    env_logger::Builder::new()
        .parse_filters(&filter)
        .format_timestamp(None)
        .init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(execute(cli, level == "debug"));
}
