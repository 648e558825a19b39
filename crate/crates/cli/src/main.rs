use clap::Parser;

fn main() {
    let cli = match rocpose_cli::Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help/version print to stdout and exit 0; real usage errors
            // exit 2.
            let _ = err.print();
            std::process::exit(err.exit_code());
        }
    };
    if let Err(err) = rocpose_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
