// Inference allocates and frees several MB per frame; glibc's default trimming
// turns that into page faults on every frame.
#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    std::process::exit(gid::pipeline::run_cli(std::env::args_os()));
}
