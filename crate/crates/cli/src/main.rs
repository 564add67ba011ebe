use std::process::exit;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    exit(pomdp_learn_cli::run(&args));
}
