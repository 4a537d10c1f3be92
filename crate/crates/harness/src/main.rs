use clap::Parser;
use varred_harness::cli::{init_threads, run, Args};

fn main() {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let result = init_threads().and_then(|()| run(&args));
    match result {
        Ok(dir) => println!("{}", dir.join("summary.txt").display()),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
