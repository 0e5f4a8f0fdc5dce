use clap::Parser;
use ktriage::cli;

fn main() {
    let args = cli::Cli::parse();
    let mut out = std::io::stdout();
    let mut err = std::io::stderr();
    std::process::exit(cli::run(args, &mut out, &mut err));
}
