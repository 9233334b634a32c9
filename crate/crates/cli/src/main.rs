use clap::Parser;
use raf_cli::{run, Cli, EXIT_OK};

fn main() {
    let cli = Cli::parse();
    match run(cli.command, &cli.opts) {
        Ok(dir) => {
            eprintln!("wrote {}", dir.display());
            std::process::exit(EXIT_OK);
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
