#![no_main]

use geopretrain_core::checkpoint::Checkpoint;
use libfuzzer_sys::fuzz_target;
use sha2::{Digest, Sha256};

fn check(bytes: &[u8]) {
    if let Ok(ckpt) = Checkpoint::from_bytes(bytes) {
        let again = ckpt.to_bytes().expect("decoded checkpoint re-encodes");
        let back = Checkpoint::from_bytes(&again).expect("re-encoded checkpoint decodes");
        assert_eq!(back.shapes(), ckpt.shapes());
    }
}

fuzz_target!(|data: &[u8]| {
    check(data);
    // Reseal with a valid digest so mutations reach the header and payload.
    let body = &data[..data.len().saturating_sub(32)];
    let mut sealed = body.to_vec();
    sealed.extend_from_slice(&Sha256::digest(body));
    check(&sealed);
});
