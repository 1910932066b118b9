use clap::Parser;

fn main() {
    let cli = tpconv_cli::Cli::parse();
    if let Err(err) = tpconv_cli::dispatch(cli) {
        eprintln!("error: {err}");
        std::process::exit(tpconv_cli::exit_code(&err));
    }
}
