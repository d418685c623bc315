fn main() {
    std::process::exit(apfcn::run(std::env::args_os()));
}
