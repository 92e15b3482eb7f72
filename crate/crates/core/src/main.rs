mod cli;

use std::io;

use clap::Parser;

fn main() {
    let parsed = match cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return;
        }
        Err(e) => {
            cli::fail(&mut io::stderr(), "usage", &e.to_string().replace("error: ", ""));
            std::process::exit(2);
        }
    };
    let code = cli::run(&parsed, &mut io::stdout().lock(), &mut io::stderr());
    std::process::exit(code);
}
