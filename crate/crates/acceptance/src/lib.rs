//! Acceptance checks for the `mnemosyne` crate; see `tests/acceptance.rs`.
//!
//! Run with `cargo test -p mnemosyne-acceptance`. Set `MNEMO_CRITERIA=1,3,7` to run a subset.
