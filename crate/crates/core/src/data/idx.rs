use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct Header {
    dims: Vec<usize>,
    data_offset: usize,
}

fn parse_header(bytes: &[u8], path: &Path, magic: u32) -> Result<Header> {
    let err = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset,
        msg,
    };
    if bytes.len() < 4 {
        return Err(err(0, "file shorter than the 4-byte magic".into()));
    }
    let found = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
    if found != magic {
        return Err(err(0, format!("magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header_len = 4 + 4 * ndim;
    if bytes.len() < header_len {
        return Err(err(4, format!("truncated header: need {header_len} bytes, have {}", bytes.len())));
    }
    let dims = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect::<Vec<_>>();
    let payload: usize = dims.iter().product();
    if bytes.len() < header_len + payload {
        return Err(err(
            bytes.len(),
            format!("truncated payload: dims {dims:?} need {payload} bytes after header, have {}", bytes.len() - header_len),
        ));
    }
    Ok(Header {
        dims,
        data_offset: header_len,
    })
}

/// Load an IDX image/label pair (unsigned-byte payloads). Features are
/// scaled to `[0, 1]` and shaped `[1, rows, cols]`.
///
/// With `num_classes` set, every label must lie below it (62 for EMNIST
/// byclass); otherwise the class count is `max label + 1`. `limit` keeps
/// only the first samples.
pub fn load_idx(images_path: &Path, labels_path: &Path, num_classes: Option<usize>, limit: Option<usize>) -> Result<Dataset> {
    let img_bytes = std::fs::read(images_path)?;
    let lbl_bytes = std::fs::read(labels_path)?;
    let img = parse_header(&img_bytes, images_path, IDX_IMAGES_MAGIC)?;
    let lbl = parse_header(&lbl_bytes, labels_path, IDX_LABELS_MAGIC)?;
    if img.dims[0] != lbl.dims[0] {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            msg: format!("{} labels for {} images", lbl.dims[0], img.dims[0]),
        });
    }
    let n = limit.map_or(img.dims[0], |l| l.min(img.dims[0]));
    let (rows, cols) = (img.dims[1], img.dims[2]);
    let per = rows * cols;
    let features = img_bytes[img.data_offset..img.data_offset + n * per]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    let labels: Vec<usize> = lbl_bytes[lbl.data_offset..lbl.data_offset + n]
        .iter()
        .map(|&b| b as usize)
        .collect();
    let classes = match num_classes {
        Some(c) => {
            if let Some(pos) = labels.iter().position(|&y| y >= c) {
                return Err(Error::Data {
                    position: pos,
                    msg: format!("label {} outside [0, {})", labels[pos], c),
                });
            }
            c
        }
        None => labels.iter().max().map_or(1, |m| m + 1),
    };
    Dataset::new(vec![1, rows, cols], features, labels, classes)
}
