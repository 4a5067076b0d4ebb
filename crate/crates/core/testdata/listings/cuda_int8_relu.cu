extern "C" __global__ void 
ReLUForward(const uint32_t n, const uint8_t* in, uint8_t* out, const int8_t shift_bits, const int16_t in_zero, const int32_t mult, const int8_t shift, const int32_t out_zero, const int32_t out_min, const int32_t out_max) {
	for (uint_tp index = blockIdx.x * blockDim.x + threadIdx.x; index < (n); index += blockDim.x * gridDim.x) {
		Difftype relu = max((Difftype)((Difftype)(in[index]) - in_zero), (Difftype)0);
		Acctype reg = (Acctype)(((Multtype)(relu) * (Multtype)(mult)) / ((Multtype)1 << shift_bits));
		if (shift >= 0) {
			reg = reg >> shift;
		} else {
			reg = reg << -shift;
		}
		out[index] = (Dtype)(min(max(reg + out_zero, out_min), out_max));
	}
}
