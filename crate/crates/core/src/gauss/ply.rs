//! Binary little-endian PLY persistence using the de-facto splatting vertex
//! schema: `x y z f_dc_* f_rest_* opacity scale_* rot_*`, all float32.
//! The reader tolerates extra float properties (normals etc.) and reports
//! parse failures with the byte offset where they were detected.

use super::{sh, GaussianCloud};
use crate::error::{Error, Result};
use nalgebra::Vector3;
use std::io::Write;
use std::path::Path;

fn header(cloud: &GaussianCloud) -> String {
    let mut h = String::from("ply\nformat binary_little_endian 1.0\n");
    h.push_str(&format!("element vertex {}\n", cloud.len()));
    let mut prop = |name: &str| h.push_str(&format!("property float {name}\n"));
    for name in ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"] {
        prop(name);
    }
    let rest = 3 * (sh::band_count(cloud.sh_degree) - 1);
    for i in 0..rest {
        prop(&format!("f_rest_{i}"));
    }
    for name in ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"] {
        prop(name);
    }
    h.push_str("end_header\n");
    h
}

pub fn encode(cloud: &GaussianCloud) -> Result<Vec<u8>> {
    cloud.validate()?;
    let bands = sh::band_count(cloud.sh_degree);
    let mut out = header(cloud).into_bytes();
    let put = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
    for i in 0..cloud.len() {
        let m = cloud.means[i];
        put(&mut out, m.x);
        put(&mut out, m.y);
        put(&mut out, m.z);
        let sh_i = cloud.sh_of(i);
        for ch in 0..3 {
            put(&mut out, sh_i[ch]); // band 0
        }
        // f_rest is channel-major over the remaining bands
        for ch in 0..3 {
            for b in 1..bands {
                put(&mut out, sh_i[b * 3 + ch]);
            }
        }
        put(&mut out, cloud.opacity_logits[i]);
        for k in 0..3 {
            put(&mut out, cloud.log_scales[i][k]);
        }
        for r in cloud.rotations[i] {
            put(&mut out, r);
        }
    }
    Ok(out)
}

pub fn ply_write(cloud: &GaussianCloud, path: &Path) -> Result<()> {
    let bytes = encode(cloud)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn ply_read(path: &Path) -> Result<GaussianCloud> {
    decode(&std::fs::read(path)?)
}

struct HeaderInfo {
    count: usize,
    properties: Vec<String>,
    payload_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<HeaderInfo> {
    let err = |offset: usize, msg: &str| Error::PlyParse { offset: offset as u64, msg: msg.into() };
    let mut pos = 0usize;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| err(start, "unterminated header line"))?;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| err(start, "non-utf8 header line"))?
            .trim_end_matches('\r')
            .to_string();
        *pos = end + 1;
        Ok((start, line))
    };

    let (off, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(err(off, "missing 'ply' magic"));
    }
    let (off, format) = next_line(&mut pos)?;
    if format != "format binary_little_endian 1.0" {
        return Err(err(off, &format!("unsupported format line '{format}'")));
    }

    let mut count: Option<usize> = None;
    let mut properties = Vec::new();
    loop {
        let (off, line) = next_line(&mut pos)?;
        if line == "end_header" {
            break;
        }
        if line.starts_with("comment") {
            continue;
        }
        if let Some(rest) = line.strip_prefix("element ") {
            let mut parts = rest.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("vertex"), Some(n)) => {
                    count = Some(n.parse().map_err(|_| err(off, "bad vertex count"))?);
                }
                (Some(other), _) => {
                    return Err(err(off, &format!("unsupported element '{other}'")));
                }
                _ => return Err(err(off, "malformed element line")),
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("property ") {
            let mut parts = rest.split_whitespace();
            match (parts.next(), parts.next()) {
                (Some("float"), Some(name)) => properties.push(name.to_string()),
                (Some(ty), _) => {
                    return Err(err(off, &format!("unsupported property type '{ty}'")));
                }
                _ => return Err(err(off, "malformed property line")),
            }
            continue;
        }
        return Err(err(off, &format!("unexpected header line '{line}'")));
    }

    let count = count.ok_or_else(|| err(pos, "missing vertex element"))?;
    Ok(HeaderInfo { count, properties, payload_start: pos })
}

pub fn decode(bytes: &[u8]) -> Result<GaussianCloud> {
    let info = parse_header(bytes)?;
    let err_at = |offset: usize, msg: String| Error::PlyParse { offset: offset as u64, msg };

    let find = |name: &str| -> Result<usize> {
        info.properties.iter().position(|p| p == name).ok_or_else(|| {
            err_at(info.payload_start, format!("missing property '{name}'"))
        })
    };

    let ix = find("x")?;
    let iy = find("y")?;
    let iz = find("z")?;
    let idc = [find("f_dc_0")?, find("f_dc_1")?, find("f_dc_2")?];
    let iop = find("opacity")?;
    let isc = [find("scale_0")?, find("scale_1")?, find("scale_2")?];
    let irot = [find("rot_0")?, find("rot_1")?, find("rot_2")?, find("rot_3")?];

    let rest_count = info.properties.iter().filter(|p| p.starts_with("f_rest_")).count();
    if rest_count % 3 != 0 {
        return Err(err_at(info.payload_start, format!("f_rest count {rest_count} not divisible by 3")));
    }
    let rest_per_channel = rest_count / 3;
    let degree = match rest_per_channel {
        0 => 0,
        3 => 1,
        8 => 2,
        15 => 3,
        other => {
            return Err(err_at(
                info.payload_start,
                format!("f_rest per-channel count {other} does not match any SH degree <= 3"),
            ))
        }
    };
    let mut irest = vec![0usize; rest_count];
    for k in 0..rest_count {
        irest[k] = find(&format!("f_rest_{k}"))?;
    }

    let stride = info.properties.len() * 4;
    let need = info.count * stride;
    let have = bytes.len() - info.payload_start;
    if have < need {
        return Err(err_at(
            info.payload_start + have,
            format!("truncated payload: need {need} bytes, have {have}"),
        ));
    }

    let bands = sh::band_count(degree);
    let mut cloud = GaussianCloud::empty(degree);
    for v in 0..info.count {
        let base = info.payload_start + v * stride;
        let field = |slot: usize| -> f64 {
            let o = base + slot * 4;
            f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64
        };
        cloud.means.push(Vector3::new(field(ix), field(iy), field(iz)));
        cloud.log_scales.push(Vector3::new(field(isc[0]), field(isc[1]), field(isc[2])));
        cloud.rotations.push([field(irot[0]), field(irot[1]), field(irot[2]), field(irot[3])]);
        cloud.opacity_logits.push(field(iop));
        for ch in 0..3 {
            cloud.sh_coeffs.push(field(idc[ch]));
        }
        // reorder channel-major f_rest into band-major
        let start = cloud.sh_coeffs.len();
        cloud.sh_coeffs.resize(start + (bands - 1) * 3, 0.0);
        for ch in 0..3 {
            for b in 1..bands {
                let v = field(irest[ch * (bands - 1) + (b - 1)]);
                cloud.sh_coeffs[start + (b - 1) * 3 + ch] = v;
            }
        }
        cloud.frozen.push(false);
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::seeded_rng;
    use rand::Rng;

    fn random_cloud(n: usize, degree: usize, seed: u64) -> GaussianCloud {
        let mut rng = seeded_rng(seed);
        let mut c = GaussianCloud::empty(degree);
        let bands = sh::band_count(degree);
        for _ in 0..n {
            c.means.push(Vector3::new(
                rng.random::<f64>() * 10.0 - 5.0,
                rng.random::<f64>() * 10.0 - 5.0,
                rng.random::<f64>() * 10.0 - 5.0,
            ));
            c.log_scales.push(Vector3::new(
                rng.random::<f64>() * 4.0 - 3.0,
                rng.random::<f64>() * 4.0 - 3.0,
                rng.random::<f64>() * 4.0 - 3.0,
            ));
            let raw = [
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
                rng.random::<f64>() - 0.5,
            ];
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            c.rotations.push([raw[0] / norm, raw[1] / norm, raw[2] / norm, raw[3] / norm]);
            c.opacity_logits.push(rng.random::<f64>() * 6.0 - 3.0);
            for _ in 0..bands * 3 {
                c.sh_coeffs.push(rng.random::<f64>() * 2.0 - 1.0);
            }
            c.frozen.push(false);
        }
        c
    }

    fn assert_f32_equal(cloud: &GaussianCloud, back: &GaussianCloud) {
        assert_eq!(cloud.len(), back.len());
        assert_eq!(cloud.sh_degree, back.sh_degree);
        for i in 0..cloud.len() {
            for k in 0..3 {
                assert_eq!(back.means[i][k], cloud.means[i][k] as f32 as f64);
                assert_eq!(back.log_scales[i][k], cloud.log_scales[i][k] as f32 as f64);
            }
            for k in 0..4 {
                assert_eq!(back.rotations[i][k], cloud.rotations[i][k] as f32 as f64);
            }
            assert_eq!(back.opacity_logits[i], cloud.opacity_logits[i] as f32 as f64);
        }
        for (a, b) in cloud.sh_coeffs.iter().zip(back.sh_coeffs.iter()) {
            assert_eq!(*b, *a as f32 as f64);
        }
    }

    #[test]
    fn empty_cloud_round_trips() {
        let c = GaussianCloud::empty(0);
        let bytes = encode(&c).unwrap();
        assert!(String::from_utf8_lossy(&bytes).contains("element vertex 0"));
        let back = decode(&bytes).unwrap();
        assert_eq!(back.len(), 0);
    }

    #[test]
    fn single_gaussian_round_trip() {
        // quaternions survive f32 truncation only if representable; use exact values
        let mut c = random_cloud(1, 0, 1);
        c.rotations[0] = [1.0, 0.0, 0.0, 0.0];
        let back = decode(&encode(&c).unwrap()).unwrap();
        assert_f32_equal(&c, &back);
    }

    #[test]
    fn degree_three_round_trip() {
        let mut c = random_cloud(7, 3, 2);
        for q in &mut c.rotations {
            *q = [1.0, 0.0, 0.0, 0.0];
        }
        let back = decode(&encode(&c).unwrap()).unwrap();
        assert_f32_equal(&c, &back);
    }

    #[test]
    fn missing_rot3_is_parse_error() {
        let c = random_cloud(2, 0, 3);
        let bytes = encode(&c).unwrap();
        let text = String::from_utf8_lossy(&bytes).to_string();
        let mangled = text.replacen("property float rot_3\n", "", 1).into_bytes();
        match decode(&mangled) {
            Err(Error::PlyParse { msg, .. }) => assert!(msg.contains("rot_3"), "{msg}"),
            other => panic!("expected PlyParse, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let c = random_cloud(4, 0, 4);
        let mut bytes = encode(&c).unwrap();
        bytes.truncate(bytes.len() - 7);
        match decode(&bytes) {
            Err(Error::PlyParse { offset, msg }) => {
                assert!(msg.contains("truncated"), "{msg}");
                assert!(offset > 0);
            }
            other => panic!("expected PlyParse, got {other:?}"),
        }
    }

    #[test]
    fn unknown_float_properties_are_skipped() {
        // emulate files that carry nx/ny/nz normals
        let c = random_cloud(2, 0, 5);
        let bytes = encode(&c).unwrap();
        let text = String::from_utf8_lossy(&bytes).to_string();
        let with_normals = text.replacen(
            "property float f_dc_0\n",
            "property float nx\nproperty float ny\nproperty float nz\nproperty float f_dc_0\n",
            1,
        );
        // rebuild payload with three zero floats inserted per vertex
        let header_end = with_normals.find("end_header\n").unwrap() + "end_header\n".len();
        let old_header_end = text.find("end_header\n").unwrap() + "end_header\n".len();
        let mut out = with_normals.as_bytes()[..header_end].to_vec();
        let payload = &bytes[old_header_end..];
        let stride = 15 * 4;
        for v in 0..2 {
            let row = &payload[v * stride..(v + 1) * stride];
            out.extend_from_slice(&row[0..12]); // x y z
            out.extend_from_slice(&[0u8; 12]); // nx ny nz
            out.extend_from_slice(&row[12..]);
        }
        let back = decode(&out).unwrap();
        assert_f32_equal(&c, &back);
    }

    #[test]
    fn ascii_format_rejected() {
        let bytes = b"ply\nformat ascii 1.0\nelement vertex 0\nend_header\n".to_vec();
        assert!(matches!(decode(&bytes), Err(Error::PlyParse { .. })));
    }
}
