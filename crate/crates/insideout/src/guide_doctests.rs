//! Doc-test bindings for the book chapters.
//!
//! The narrative guide lives in `book/` at the repository root; each chapter
//! is included here as module documentation so `cargo test --doc` compiles
//! and runs every code snippet in the book. If a chapter drifts from the
//! library API, the build breaks.
