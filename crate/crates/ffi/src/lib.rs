//! C ABI stub, filled in once the core surface settles.
