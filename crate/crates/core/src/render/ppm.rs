use std::io::Write;

use super::raster::SubImage;

/// Writes a binary P6 pixel map with 8-bit channels.
pub fn write_ppm<W: Write>(mut out: W, img: &SubImage) -> std::io::Result<()> {
    write!(out, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_payload() {
        let img = SubImage::filled(8, 8, 1.0);
        let mut buf = Vec::new();
        write_ppm(&mut buf, &img).unwrap();
        assert!(buf.starts_with(b"P6\n8 8\n255\n"));
        assert_eq!(buf.len(), 11 + 8 * 8 * 3);
        assert!(buf[11..].iter().all(|&b| b == 255));
    }
}
