use clap::Parser;

fn main() {
    let cli = mdnmt_cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = mdnmt_cli::run(cli, &mut stdout) {
        eprintln!("{e}");
        std::process::exit(mdnmt_cli::exit_code(&e));
    }
}
