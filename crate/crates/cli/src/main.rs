fn main() {
    let code = layerprobe_cli::run_cli(std::env::args_os());
    std::process::exit(code);
}
