use clap::Parser;

use catt_cli::{dispatch, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(out) => {
            for f in &out.files {
                println!("{}", f.display());
            }
            eprintln!("{}", out.message);
            std::process::exit(out.exit_code);
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    }
}
