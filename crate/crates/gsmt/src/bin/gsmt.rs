fn main() {
    eprintln!("gsmt: CLI wiring pending");
    std::process::exit(1);
}
