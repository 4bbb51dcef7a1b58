fn main() {
    std::process::exit(etg::ctrlcli::dispatch(std::env::args_os()));
}
