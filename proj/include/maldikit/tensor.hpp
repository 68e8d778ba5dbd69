#ifndef MALDIKIT_TENSOR_HPP
#define MALDIKIT_TENSOR_HPP

// Minimal reverse-mode differentiable array engine. Dynamic tape: every op
// appends a node holding its value and a closure that pushes gradients into
// its parents. 64-bit floats throughout.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "maldikit/common.hpp"

namespace maldikit {

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // allocated lazily, same size as value
    bool requires_grad = false;
    int64_t id = 0;  // creation order; reverse traversal sorts on it
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;  // pulls from this->grad into parents

    std::vector<double>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

// Handle to a tape node. Cheap to copy; copies alias the same node.
class DiffArray {
  public:
    DiffArray() = default;
    explicit DiffArray(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static DiffArray constant(Shape shape, std::vector<double> values);
    static DiffArray zeros(Shape shape);
    static DiffArray full(Shape shape, double x);
    static DiffArray parameter(Shape shape, std::vector<double> values);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int64_t size() const { return int64_t(node_->value.size()); }
    const std::vector<double>& values() const { return node_->value; }
    std::vector<double>& mutable_values() { return node_->value; }
    double scalar() const;

    bool requires_grad() const { return node_->requires_grad; }
    std::vector<double>& grad() { return node_->ensure_grad(); }
    const std::vector<double>& grad_view() const { return node_->grad; }
    void zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

    std::shared_ptr<Node> node_;
};

// While a guard is alive, ops create plain constants: no parents, no
// backprop closures. Use for validation, generation, any inference.
bool grad_enabled();
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    bool prev;
};

// Reverse-mode accumulation from a scalar loss. Gradients sum over every
// use of a node; call zero_grad on parameters between steps.
void backward(const DiffArray& loss);

// ---- elementwise ----
DiffArray add(const DiffArray& a, const DiffArray& b);
DiffArray sub(const DiffArray& a, const DiffArray& b);
DiffArray mul(const DiffArray& a, const DiffArray& b);
DiffArray neg(const DiffArray& a);
DiffArray add_scalar(const DiffArray& a, double c);
DiffArray mul_scalar(const DiffArray& a, double c);
DiffArray vexp(const DiffArray& a);
DiffArray vlog(const DiffArray& a);
DiffArray clip(const DiffArray& a, double lo, double hi);  // zero grad outside [lo,hi]
DiffArray relu(const DiffArray& a);
DiffArray leaky_relu(const DiffArray& a, double slope = 0.2);
DiffArray sigmoid(const DiffArray& a);
DiffArray detach(const DiffArray& a);  // cuts the tape

// ---- reductions / structure ----
DiffArray sum(const DiffArray& a);   // -> shape {1}
DiffArray mean(const DiffArray& a);  // -> shape {1}
DiffArray reshape(const DiffArray& a, Shape shape);
DiffArray concat_cols(const DiffArray& a, const DiffArray& b);      // [N,A]+[N,B] -> [N,A+B]
DiffArray slice_cols(const DiffArray& a, int lo, int hi);           // [N,F] -> [N,hi-lo]
DiffArray concat_channels(const DiffArray& a, const DiffArray& b);  // [N,C1,L]+[N,C2,L]

// ---- linear algebra / layers ----
DiffArray matmul(const DiffArray& x, const DiffArray& w);       // [N,A]x[A,B]
DiffArray add_row_bias(const DiffArray& x, const DiffArray& b); // [N,B]+[B]
DiffArray conv1d(const DiffArray& x, const DiffArray& w, const DiffArray& b);  // same-length, stride 1
DiffArray maxpool1d(const DiffArray& x);    // window 2, stride 2; L must be even
DiffArray upsample2(const DiffArray& x);    // nearest neighbour x2
DiffArray groupnorm(const DiffArray& x, const DiffArray& gamma, const DiffArray& beta,
                    int groups, double eps = 1e-5);
DiffArray dropout(const DiffArray& x, double p, bool train, RngStream& rng);  // inverted scaling
DiffArray embedding(const DiffArray& table, const std::vector<int>& idx);     // [V,E],[N] -> [N,E]
DiffArray tile_channels(const DiffArray& e, int len);                // [N,E] -> [N,E,len]
DiffArray add_channel_bias(const DiffArray& x, const DiffArray& b);  // [N,C,L]+[N,C]
DiffArray film(const DiffArray& x, const DiffArray& scale, const DiffArray& shift);  // x*(1+s)+t
DiffArray softmax_cross_entropy(const DiffArray& logits, const std::vector<int>& labels);  // mean NLL
DiffArray pad_right(const DiffArray& x, int target_len, double fill);  // [N,C,L] -> [N,C,target]
DiffArray crop_right(const DiffArray& x, int target_len);              // [N,C,L] -> [N,C,target]

// Standard normal draws as a constant array.
DiffArray sample_gaussian(const Shape& shape, RngStream& rng);

// ---- optimizer ----
struct AdamState {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    int64_t step = 0;
    std::vector<std::vector<double>> m, v;

    void init(const std::vector<DiffArray>& params);
};

// theta <- theta - lr * mhat / (sqrt(vhat) + eps), reading param.grad().
void adam_step(std::vector<DiffArray>& params, AdamState& state);

// ---- layer descriptions ----
enum class LayerKind {
    Dense,
    Conv1d,
    UpsampleConv1d,  // nearest x2 upsample followed by conv1d
    MaxPool1d,
    GroupNorm,
    Dropout,
    Relu,
    LeakyRelu,
    Sigmoid,
    Embedding,
};

struct LayerSpec {
    LayerKind kind;
    int in = 0;        // dense/conv in features or channels; embedding vocab
    int out = 0;       // dense/conv out features or channels; embedding dim
    int kernel = 0;    // conv kernel size
    int groups = 0;    // groupnorm
    double p = 0.0;    // dropout probability
    double slope = 0.2;  // leaky relu
    bool sigmoid_init = false;  // Xavier init for sigmoid-output layers, He otherwise
};

struct Layer {
    LayerSpec spec;
    DiffArray weight, bias;    // dense/conv
    DiffArray gamma, beta;     // groupnorm affine
    DiffArray table;           // embedding

    static Layer make(const LayerSpec& spec, RngStream& rng);
    std::vector<DiffArray> params() const;
};

// Standard layer semantics; dropout only active in train mode. Embedding
// layers take indices via the extra argument.
DiffArray forward(Layer& layer, const DiffArray& x, bool train, RngStream* rng = nullptr,
                  const std::vector<int>* indices = nullptr);

// He-style (fan-in) or Xavier uniform init used by Layer::make.
std::vector<double> init_uniform_fan(int64_t n, int64_t fan_in, int64_t fan_out, bool xavier,
                                     RngStream& rng);

}  // namespace maldikit

#endif
