fn main() {
    std::process::exit(symtrans::run(std::env::args_os()));
}
