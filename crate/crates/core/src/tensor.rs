use crate::scalar::Scalar;

/// Interleaved `height x width x channels` image tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    pub width: u32,
    pub height: u32,
    pub channels: u8,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(width: u32, height: u32, channels: u8) -> Self {
        Self { width, height, channels, data: vec![S::zero(); width as usize * height as usize * channels as usize] }
    }

    pub fn filled(width: u32, height: u32, channels: u8, value: S) -> Self {
        Self { width, height, channels, data: vec![value; width as usize * height as usize * channels as usize] }
    }

    pub fn shape(&self) -> (u32, u32, u8) {
        (self.width, self.height, self.channels)
    }

    pub fn pixel(&self, x: u32, y: u32) -> &[S] {
        let c = self.channels as usize;
        let i = (y as usize * self.width as usize + x as usize) * c;
        &self.data[i..i + c]
    }

    /// Mean over channels at each pixel.
    pub fn channel_mean(&self, x: u32, y: u32) -> S {
        let px = self.pixel(x, y);
        let sum = px.iter().fold(S::zero(), |a, &b| a + b);
        sum / S::from_byte(self.channels)
    }
}
