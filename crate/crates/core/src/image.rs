//! Source rasters, the protocol-aligned block grid, and partial-observation
//! reconstruction.
//!
//! A raster is split into fixed-size blocks (default 32x16 pixels). Blocks are
//! the unit of transmission, loss, and utility. Block ids run 0..n_blocks-1 in
//! row-major raster order; that numbering is canonical and doubles as the
//! raster arrival order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Identifier of one packet block within a [`BlockGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[derive(serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct BlockId(pub u32);

impl BlockId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for BlockId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Width/height/channel metadata of a raster, without the pixel bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RasterMeta {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
}

impl RasterMeta {
    pub fn byte_len(&self) -> usize {
        self.width as usize * self.height as usize * self.channels as usize
    }
}

/// A width x height x channels grid of pixel bytes, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageRaster {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
}

impl ImageRaster {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Channels(channels));
        }
        let want = width as usize * height as usize * channels as usize;
        if pixels.len() != want {
            return Err(Error::PixelLength {
                got: pixels.len(),
                want,
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// All-zero raster of the given shape.
    pub fn zeroed(meta: RasterMeta) -> Self {
        Self {
            width: meta.width,
            height: meta.height,
            channels: meta.channels,
            pixels: vec![0; meta.byte_len()],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn meta(&self) -> RasterMeta {
        RasterMeta {
            width: self.width,
            height: self.height,
            channels: self.channels,
        }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    /// Byte offset of pixel (x, y), first channel.
    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * self.channels as usize
    }

    /// Scalar intensity of pixel (x, y): the byte itself for grayscale, the
    /// integer mean of the channels otherwise.
    pub fn intensity(&self, x: u32, y: u32) -> u8 {
        let off = self.offset(x, y);
        match self.channels {
            1 => self.pixels[off],
            _ => {
                let sum: u16 = self.pixels[off..off + self.channels as usize]
                    .iter()
                    .map(|&b| u16::from(b))
                    .sum();
                (sum / u16::from(self.channels)) as u8
            }
        }
    }

    /// Zero-pads on the right/bottom so both dimensions become multiples of
    /// the block size. Returns `self` unchanged when already aligned.
    pub fn pad_to_multiple(self, block_width: u32, block_height: u32) -> Self {
        let new_w = self.width.div_ceil(block_width) * block_width;
        let new_h = self.height.div_ceil(block_height) * block_height;
        if new_w == self.width && new_h == self.height {
            return self;
        }
        let ch = self.channels as usize;
        let mut pixels = vec![0u8; new_w as usize * new_h as usize * ch];
        for y in 0..self.height as usize {
            let src = y * self.width as usize * ch;
            let dst = y * new_w as usize * ch;
            pixels[dst..dst + self.width as usize * ch]
                .copy_from_slice(&self.pixels[src..src + self.width as usize * ch]);
        }
        Self {
            width: new_w,
            height: new_h,
            channels: self.channels,
            pixels,
        }
    }
}

/// Partition of a raster into fixed-size blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BlockGrid {
    pub block_width: u32,
    pub block_height: u32,
    pub cols: u32,
    pub rows: u32,
}

/// Default block geometry: 32x16 pixels.
pub const DEFAULT_BLOCK_WIDTH: u32 = 32;
pub const DEFAULT_BLOCK_HEIGHT: u32 = 16;

impl BlockGrid {
    pub fn n_blocks(&self) -> u32 {
        self.cols * self.rows
    }

    /// Top-left pixel of a block.
    pub fn block_origin(&self, id: BlockId) -> (u32, u32) {
        let col = id.0 % self.cols;
        let row = id.0 / self.cols;
        (col * self.block_width, row * self.block_height)
    }

    /// Block payload size for a raster with the given channel count.
    pub fn payload_bytes(&self, channels: u8) -> usize {
        self.block_width as usize * self.block_height as usize * channels as usize
    }

    pub fn ids(&self) -> impl Iterator<Item = BlockId> {
        (0..self.n_blocks()).map(BlockId)
    }

    fn check(&self, id: BlockId) -> Result<()> {
        if id.0 >= self.n_blocks() {
            return Err(Error::BlockOutOfRange {
                id: id.0,
                n_blocks: self.n_blocks(),
            });
        }
        Ok(())
    }
}

/// Partitions a raster into blocks of the given size. The raster must already
/// be padded to multiples of the block dimensions (the loader does that).
pub fn partition(image: &ImageRaster, block_width: u32, block_height: u32) -> Result<BlockGrid> {
    assert!(block_width > 0 && block_height > 0, "block dims must be positive");
    if image.width % block_width != 0 || image.height % block_height != 0 {
        return Err(Error::Dimension {
            width: image.width,
            height: image.height,
            block_width,
            block_height,
        });
    }
    Ok(BlockGrid {
        block_width,
        block_height,
        cols: image.width / block_width,
        rows: image.height / block_height,
    })
}

/// Copies one block's pixel bytes out of the raster, row-major within the block.
pub fn extract_block(image: &ImageRaster, grid: &BlockGrid, id: BlockId) -> Result<Vec<u8>> {
    grid.check(id)?;
    let (x0, y0) = grid.block_origin(id);
    let ch = image.channels as usize;
    let row_bytes = grid.block_width as usize * ch;
    let mut out = Vec::with_capacity(grid.payload_bytes(image.channels));
    for y in y0..y0 + grid.block_height {
        let off = image.offset(x0, y);
        out.extend_from_slice(&image.pixels[off..off + row_bytes]);
    }
    Ok(out)
}

fn place_block(target: &mut ImageRaster, grid: &BlockGrid, id: BlockId, payload: &[u8]) {
    let (x0, y0) = grid.block_origin(id);
    let ch = target.channels as usize;
    let row_bytes = grid.block_width as usize * ch;
    for (i, y) in (y0..y0 + grid.block_height).enumerate() {
        let off = target.offset(x0, y);
        target.pixels[off..off + row_bytes]
            .copy_from_slice(&payload[i * row_bytes..(i + 1) * row_bytes]);
    }
}

/// Cumulative set of delivered blocks plus the event step each one arrived at.
/// Monotone: a block once received is never removed; duplicate inserts are
/// no-ops and keep the first arrival step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReceptionSet {
    arrival_index: Vec<Option<u32>>,
    order: Vec<BlockId>,
}

impl ReceptionSet {
    pub fn new(n_blocks: u32) -> Self {
        Self {
            arrival_index: vec![None; n_blocks as usize],
            order: Vec::new(),
        }
    }

    /// Records a delivery. Returns true if the block is new, false for a
    /// duplicate (which changes nothing).
    pub fn insert(&mut self, id: BlockId, step: u32) -> bool {
        let slot = &mut self.arrival_index[id.index()];
        if slot.is_some() {
            return false;
        }
        *slot = Some(step);
        self.order.push(id);
        true
    }

    pub fn contains(&self, id: BlockId) -> bool {
        self.arrival_index
            .get(id.index())
            .is_some_and(|s| s.is_some())
    }

    pub fn arrival_step(&self, id: BlockId) -> Option<u32> {
        self.arrival_index.get(id.index()).copied().flatten()
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn n_blocks(&self) -> u32 {
        self.arrival_index.len() as u32
    }

    pub fn is_complete(&self) -> bool {
        self.order.len() == self.arrival_index.len()
    }

    /// Block ids in first-arrival order.
    pub fn first_arrivals(&self) -> &[BlockId] {
        &self.order
    }

    /// Received block ids in ascending id order.
    pub fn received_ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.arrival_index
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_some())
            .map(|(i, _)| BlockId(i as u32))
    }
}

/// Per-block payload store used by the receiver side of [`reconstruct`].
#[derive(Debug, Clone, Default)]
pub struct BlockPayloads {
    payloads: BTreeMap<BlockId, Vec<u8>>,
}

impl BlockPayloads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: BlockId, payload: Vec<u8>) {
        self.payloads.entry(id).or_insert(payload);
    }

    pub fn get(&self, id: BlockId) -> Option<&[u8]> {
        self.payloads.get(&id).map(Vec::as_slice)
    }

    /// Payload store holding every block of a source image.
    pub fn from_image(image: &ImageRaster, grid: &BlockGrid) -> Result<Self> {
        let mut store = Self::new();
        for id in grid.ids() {
            store.insert(id, extract_block(image, grid, id)?);
        }
        Ok(store)
    }
}

/// Builds the partial observation for a reception set: received blocks are
/// placed at their fixed spatial regions, everything else stays zero. The
/// result depends only on the set of received blocks, never on arrival order.
pub fn reconstruct(
    meta: RasterMeta,
    grid: &BlockGrid,
    reception: &ReceptionSet,
    payloads: &BlockPayloads,
) -> Result<ImageRaster> {
    let mut out = ImageRaster::zeroed(meta);
    for id in reception.received_ids() {
        grid.check(id)?;
        let payload = payloads.get(id).ok_or(Error::MissingPayload { id: id.0 })?;
        place_block(&mut out, grid, id, payload);
    }
    Ok(out)
}

/// Partial observation built directly from the source raster; identical to
/// [`reconstruct`] fed with payloads extracted from `image`.
pub fn partial_observation(
    image: &ImageRaster,
    grid: &BlockGrid,
    reception: &ReceptionSet,
) -> ImageRaster {
    let mut out = ImageRaster::zeroed(image.meta());
    let ch = image.channels as usize;
    let row_bytes = grid.block_width as usize * ch;
    for id in reception.received_ids() {
        let (x0, y0) = grid.block_origin(id);
        for y in y0..y0 + grid.block_height {
            let off = image.offset(x0, y);
            out.pixels[off..off + row_bytes].copy_from_slice(&image.pixels[off..off + row_bytes]);
        }
    }
    out
}

/// Copy of the raster with one block's region zeroed; the source is untouched.
pub fn mask_block(image: &ImageRaster, grid: &BlockGrid, id: BlockId) -> Result<ImageRaster> {
    grid.check(id)?;
    let mut out = image.clone();
    let (x0, y0) = grid.block_origin(id);
    let ch = image.channels as usize;
    let row_bytes = grid.block_width as usize * ch;
    for y in y0..y0 + grid.block_height {
        let off = out.offset(x0, y);
        out.pixels[off..off + row_bytes].fill(0);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// On-disk raster format (see docs/PROTOCOL.md): magic "RIMG", version byte,
// width u32 BE, height u32 BE, channels u8, then raw pixel bytes.
// ---------------------------------------------------------------------------

const RASTER_MAGIC: &[u8; 4] = b"RIMG";
const RASTER_VERSION: u8 = 1;

pub fn write_raster<W: Write>(mut w: W, image: &ImageRaster) -> Result<()> {
    w.write_all(RASTER_MAGIC)?;
    w.write_all(&[RASTER_VERSION])?;
    w.write_all(&image.width.to_be_bytes())?;
    w.write_all(&image.height.to_be_bytes())?;
    w.write_all(&[image.channels])?;
    w.write_all(&image.pixels)?;
    Ok(())
}

pub fn save_raster<P: AsRef<Path>>(path: P, image: &ImageRaster) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    write_raster(&mut f, image)
}

pub fn read_raster<R: Read>(mut r: R) -> Result<ImageRaster> {
    let mut head = [0u8; 14];
    r.read_exact(&mut head).map_err(|_| Error::Parse {
        what: "raster",
        detail: "truncated header".into(),
    })?;
    if &head[0..4] != RASTER_MAGIC {
        return Err(Error::Parse {
            what: "raster",
            detail: "bad magic".into(),
        });
    }
    if head[4] != RASTER_VERSION {
        return Err(Error::Parse {
            what: "raster",
            detail: format!("unsupported version {}", head[4]),
        });
    }
    let width = u32::from_be_bytes(head[5..9].try_into().unwrap());
    let height = u32::from_be_bytes(head[9..13].try_into().unwrap());
    let channels = head[13];
    if channels != 1 && channels != 3 {
        return Err(Error::Channels(channels));
    }
    let want = width as usize * height as usize * channels as usize;
    let mut pixels = vec![0u8; want];
    r.read_exact(&mut pixels).map_err(|_| Error::Parse {
        what: "raster",
        detail: "truncated pixel data".into(),
    })?;
    ImageRaster::new(width, height, channels, pixels)
}

pub fn load_raster<P: AsRef<Path>>(path: P) -> Result<ImageRaster> {
    let f = std::fs::File::open(path)?;
    read_raster(std::io::BufReader::new(f))
}

/// Loads a raster and zero-pads it to the block geometry in one step.
pub fn load_padded<P: AsRef<Path>>(
    path: P,
    block_width: u32,
    block_height: u32,
) -> Result<ImageRaster> {
    Ok(load_raster(path)?.pad_to_multiple(block_width, block_height))
}

/// Imports a binary PGM (P5) or PPM (P6) file with maxval <= 255.
pub fn import_pnm<P: AsRef<Path>>(path: P) -> Result<ImageRaster> {
    let data = std::fs::read(path)?;
    parse_pnm(&data)
}

fn parse_pnm(data: &[u8]) -> Result<ImageRaster> {
    let bad = |detail: &str| Error::Parse {
        what: "pnm",
        detail: detail.into(),
    };
    if data.len() < 2 {
        return Err(bad("truncated"));
    }
    let channels = match &data[0..2] {
        b"P5" => 1u8,
        b"P6" => 3u8,
        _ => return Err(bad("expected P5 or P6")),
    };
    let mut pos = 2usize;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // skip whitespace and '#' comment lines
        loop {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < data.len() && data[pos] == b'#' {
                while pos < data.len() && data[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < data.len() && data[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad("missing header field"));
        }
        *field = std::str::from_utf8(&data[start..pos])
            .map_err(|_| bad("non-utf8 header"))?
            .parse()
            .map_err(|_| bad("bad header number"))?;
    }
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 255 {
        return Err(bad("maxval must be 1..=255"));
    }
    // exactly one whitespace byte separates header and pixel data
    if pos >= data.len() || !data[pos].is_ascii_whitespace() {
        return Err(bad("missing header terminator"));
    }
    pos += 1;
    let want = width * height * channels as usize;
    if data.len() < pos + want {
        return Err(bad("truncated pixel data"));
    }
    ImageRaster::new(
        width as u32,
        height as u32,
        channels,
        data[pos..pos + want].to_vec(),
    )
}
