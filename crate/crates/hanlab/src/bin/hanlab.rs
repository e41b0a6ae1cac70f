use clap::Parser;
use hanlab::cli::{run, Cli};
use hanlab::Error;

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap prints its own help/usage text.
            let _ = e.print();
            std::process::exit(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::StageFailure(_) => 2,
                _ => 1,
            };
            std::process::exit(code);
        }
    }
}
