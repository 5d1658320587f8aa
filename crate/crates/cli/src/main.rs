use std::io;

fn main() {
    let env = nightlab::Env::from_process();
    let code = nightlab::run(std::env::args_os(), &env, &mut io::stdout().lock(), &mut io::stderr().lock());
    std::process::exit(code);
}
