use tallkit::profile::CountingAlloc;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc::new();

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let code = tallkit::cli::main_with(std::env::args_os(), Some(&ALLOC));
    std::process::exit(code);
}
