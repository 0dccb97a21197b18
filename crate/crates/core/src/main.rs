fn main() {
    std::process::exit(geomort::pipeline::run_command(std::env::args_os()));
}
