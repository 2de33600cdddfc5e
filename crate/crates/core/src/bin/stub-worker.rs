//! Stand-in sandbox worker for tests and fixtures.

fn main() -> std::io::Result<()> {
    chartsynth::broker::stub::run_stdio()
}
