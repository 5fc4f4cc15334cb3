use clap::Parser;
use tprnn_cli::{exit_code, run, Cli};

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
        }
        Err(err) => {
            let msg = err.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", err.category());
            std::process::exit(exit_code(&err));
        }
    }
}
