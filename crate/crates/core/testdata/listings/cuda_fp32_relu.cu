extern "C" __global__ void 
ReLUForward(const uint32_t n, const float* in, float* out, const float negative_slope) {
	for (uint_tp index = blockIdx.x * blockDim.x + threadIdx.x; index < (n); index += blockDim.x * gridDim.x) {
		out[index] = in[index] > (Dtype)0 ? in[index] : in[index] * negative_slope;
	}
}
