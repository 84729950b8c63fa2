//! Holds only the acceptance test target (`tests/acceptance.rs`).
