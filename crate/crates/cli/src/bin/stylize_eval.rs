fn main() {
    let code = glyphstyle_cli::run_eval(std::env::args_os(), &mut std::io::stdout(), &mut std::io::stderr());
    std::process::exit(code);
}
