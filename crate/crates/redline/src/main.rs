use clap::Parser;

fn main() {
    let cli = redline::cli::Cli::parse();
    if let Err(err) = redline::cli::run(cli) {
        for line in err.messages() {
            eprintln!("{line}");
        }
        std::process::exit(err.exit_code());
    }
}
