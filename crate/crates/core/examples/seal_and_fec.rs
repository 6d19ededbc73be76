//! Seals credentials, spreads them over erasure-coded blocks, loses most of
//! the blocks, and still opens the message.

use homesense::cred_envelope::{
    decode_blocks, encode_blocks, fec_params, open, seal, Credentials, KeyPair, LossTable, SealedMessage,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let keys = KeyPair::generate(&mut rng);
    let creds = Credentials::new("Home", "secret123").unwrap();
    let table = LossTable::default();

    let sealed = seal(&creds, &keys, 1_700_000_000, &mut rng);
    let wire = sealed.to_bytes();
    println!("sealed message: {} bytes", wire.len());

    for index in 0..4u8 {
        let p = fec_params(wire.len(), index, &table).unwrap();
        let blocks = encode_blocks(&wire, &p).unwrap();
        let mut survivors: Vec<usize> = (0..blocks.len()).collect();
        survivors.shuffle(&mut rng);
        survivors.truncate(p.k);
        let picked: Vec<_> = survivors.iter().map(|&i| (i, blocks[i])).collect();

        let back = decode_blocks(&picked, &p).unwrap();
        let msg = SealedMessage::from_bytes(&back).unwrap();
        let opened = open(&msg, &keys, 0).unwrap();
        println!(
            "loss {:.1}: m={} k={} -> {} of {} blocks lost, opened ssid={:?}",
            table.get(index).unwrap(),
            p.m,
            p.k,
            blocks.len() - p.k,
            blocks.len(),
            String::from_utf8_lossy(opened.ssid())
        );
    }

    let wrong = KeyPair::generate(&mut rng);
    println!("wrong keys: {}", open(&sealed, &wrong, 0).unwrap_err());
    println!("replayed:   {}", open(&sealed, &keys, sealed.global_seq).unwrap_err());
}
