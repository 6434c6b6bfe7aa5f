use clap::Parser;
use margin_metric::cli::{run, Cli};

fn main() {
    let cli = Cli::parse();
    let mut out = std::io::stdout().lock();
    let mut err = std::io::stderr();
    if let Err(e) = run(cli, &mut out, &mut err) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
