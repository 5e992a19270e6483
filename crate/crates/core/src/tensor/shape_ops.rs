//! Pure index remapping kernels.

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Copies `data` (laid out as `shape`) into the permuted layout.
pub(crate) fn permute_data<T: Copy>(
    shape: &[usize],
    data: &[T],
    axes: &[usize],
) -> (Vec<usize>, Vec<T>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides_of(shape);
    // stride in the source buffer for each output axis
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    if rank == 0 {
        out.push(data[0]);
        return (out_shape, out);
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner]);
        } else {
            let mut p = base;
            for _ in 0..inner {
                out.push(data[p]);
                p += inner_stride;
            }
        }
        // odometer over the outer axes
        let mut axis = rank - 1;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            base += src_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= src_strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}
