fn main() {
    eprintln!("hamlb: not yet wired up");
    std::process::exit(2);
}
