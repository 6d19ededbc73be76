//! Packs a provisioning header into a frame's address fields and reads it
//! back, the way a monitor-mode listener would.

use homesense::covert_frame::{parse_frame, CovertFrame, FrameHeader, PayloadChunk};

fn main() {
    let header = FrameHeader::new(5, true, 2, 40, 17).expect("fields in range");
    let chunk = PayloadChunk::try_from(&b"secret!"[..]).unwrap();
    let frame = CovertFrame::build(header.pack().unwrap(), &chunk);

    println!("header  {header:?}");
    println!("packed  {:02x?}", header.pack().unwrap());
    println!("frame   {frame}");

    let (seen, payload) = parse_frame(&frame, 5).expect("addressed to id 5");
    println!("decoded {seen:?} payload={:?}", String::from_utf8_lossy(payload.as_bytes()));

    match parse_frame(&frame, 6) {
        Ok(_) => println!("id 6 accepted a frame for id 5"),
        Err(e) => println!("id 6 drops it: {e}"),
    }

    let mut ordinary = frame;
    ordinary.dst[..2].copy_from_slice(&[0x01, 0x00]);
    println!("non-multicast destination: {}", parse_frame(&ordinary, 5).unwrap_err());
}
