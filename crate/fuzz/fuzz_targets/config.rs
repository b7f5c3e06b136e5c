#![no_main]

libfuzzer_sys::fuzz_target!(|data: &[u8]| seqinsert_fuzz::config(data));
