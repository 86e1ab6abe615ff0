use ringreg_core::alloc::CountingAlloc;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() {
    std::process::exit(ringreg::cli::run(std::env::args_os()));
}
