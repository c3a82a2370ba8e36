#pragma once

// Dense row-major tensors with reverse-mode autodiff. Templated on the
// scalar type: float for training, double for finite-difference checks.
// Graphs are built eagerly; backward() walks a deterministic topological
// order so gradient accumulation is reproducible bit-for-bit.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <unordered_set>
#include <vector>

namespace cvt {

enum class Precision { F32, F64 };

// ---------------------------------------------------------------------------
// Worker threads. Ops split loops into disjoint output ranges only, so the
// numeric result never depends on the thread count.

inline int& thread_budget() {
  static int n = 1;
  return n;
}

inline void set_threads(int n) { thread_budget() = std::max(1, n); }

namespace detail {

// Persistent workers fed chunked range jobs. Every job owns its state, so
// a worker waking late can never disturb a newer job. Chunks write
// disjoint output ranges, so results are identical for any worker count
// or scheduling.
class WorkerPool {
  struct Job {
    const std::function<void(std::size_t, std::size_t)>* body;
    std::size_t total, step, n;
    std::atomic<std::size_t> next{0};
    std::mutex mu;
    std::condition_variable done;
    std::size_t pending;
  };

 public:
  // Intentionally leaked: detached workers may still reference the pool's
  // synchronization primitives at exit, so it is never destroyed.
  static WorkerPool& instance() {
    static WorkerPool* pool = new WorkerPool();
    return *pool;
  }

  void run(std::size_t chunks, std::size_t step, std::size_t n,
           const std::function<void(std::size_t, std::size_t)>& body) {
    auto job = std::make_shared<Job>();
    job->body = &body;
    job->total = chunks;
    job->step = step;
    job->n = n;
    job->pending = chunks;
    {
      std::unique_lock<std::mutex> lock(mu_);
      ensure_workers();
      job_ = job;
      ++generation_;
    }
    cv_.notify_all();
    execute(*job);
    {
      std::unique_lock<std::mutex> lock(job->mu);
      job->done.wait(lock, [&] { return job->pending == 0; });
    }
    std::unique_lock<std::mutex> lock(mu_);
    if (job_ == job) job_.reset();
  }

 private:
  WorkerPool() = default;

  // Workers are detached: run() blocks until every chunk of its job has
  // finished, so at process exit all workers are idle in the wait.
  void ensure_workers() {
    const std::size_t want = static_cast<std::size_t>(thread_budget()) - 1;
    while (workers_ < want) {
      std::thread([this] { worker_loop(); }).detach();
      ++workers_;
    }
  }

  void worker_loop() {
    std::uint64_t seen = 0;
    while (true) {
      std::shared_ptr<Job> job;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [&] { return generation_ != seen; });
        seen = generation_;
        job = job_;
      }
      if (job) execute(*job);
    }
  }

  static void execute(Job& job) {
    std::size_t finished = 0;
    while (true) {
      const std::size_t c = job.next.fetch_add(1, std::memory_order_relaxed);
      if (c >= job.total) break;
      const std::size_t lo = c * job.step;
      const std::size_t hi = std::min(job.n, lo + job.step);
      if (lo < hi) (*job.body)(lo, hi);
      ++finished;
    }
    if (finished) {
      std::unique_lock<std::mutex> lock(job.mu);
      job.pending -= finished;
      if (job.pending == 0) job.done.notify_all();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_;
  std::size_t workers_ = 0;
  std::shared_ptr<Job> job_;
  std::uint64_t generation_ = 0;
};

}  // namespace detail

template <typename F>
void parallel_for(std::size_t n, F&& body, std::size_t grain = 4096) {
  const int workers = thread_budget();
  if (workers <= 1 || n < 2 * std::max<std::size_t>(grain, 1)) {
    body(std::size_t{0}, n);
    return;
  }
  const std::size_t chunks =
      std::min<std::size_t>(4 * workers, (n + grain - 1) / std::max<std::size_t>(grain, 1));
  const std::size_t step = (n + chunks - 1) / chunks;
  const std::function<void(std::size_t, std::size_t)> fn = std::forward<F>(body);
  detail::WorkerPool::instance().run((n + step - 1) / step, step, n, fn);
}

// ---------------------------------------------------------------------------
// Deterministic RNG helpers. Raw mt19937_64 bits are mapped to doubles by
// hand so streams depend only on the seed and draw count.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t bits() { return gen_(); }

  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  int uniform_int(int lo, int hi) {  // inclusive range
    return lo + static_cast<int>(gen_() % static_cast<std::uint64_t>(hi - lo + 1));
  }

  double gaussian() {
    double u1 = uniform();
    const double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  template <typename It>
  void shuffle(It first, It last) {
    const std::size_t n = static_cast<std::size_t>(last - first);
    for (std::size_t i = n; i > 1; --i) {
      const std::size_t j = gen_() % i;
      std::swap(first[i - 1], first[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
};

// ---------------------------------------------------------------------------

inline bool& grad_mode() {
  static bool enabled = true;
  return enabled;
}

struct NoGradGuard {
  NoGradGuard() : prev(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev; }
  bool prev;
};

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    std::vector<Tensor> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
      if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
  };

  Tensor() = default;

  static Tensor from_data(std::vector<T> data, Shape shape, bool requires_grad = false) {
    if (data.size() != shape_numel(shape))
      throw std::invalid_argument("tensor: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    Tensor t;
    t.n_ = std::make_shared<Node>();
    t.n_->shape = std::move(shape);
    t.n_->data = std::move(data);
    t.n_->requires_grad = requires_grad;
    return t;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), T(0));
    return from_data(std::move(d), std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape), value);
    return from_data(std::move(d), std::move(shape), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from_data({value}, Shape{1}, requires_grad);
  }

  static Tensor randn(Rng& rng, Shape shape, double stddev, bool requires_grad = false) {
    std::vector<T> d(shape_numel(shape));
    for (auto& v : d) v = static_cast<T>(stddev * rng.gaussian());
    return from_data(std::move(d), std::move(shape), requires_grad);
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::size_t numel() const { return n_->data.size(); }
  std::size_t dim(std::size_t i) const { return n_->shape.at(i); }
  std::size_t ndim() const { return n_->shape.size(); }

  std::vector<T>& data() { return n_->data; }
  const std::vector<T>& data() const { return n_->data; }
  std::vector<T>& grad() { return n_->grad; }
  const std::vector<T>& grad() const { return n_->grad; }
  bool requires_grad() const { return n_ && n_->requires_grad; }

  T item() const {
    if (numel() != 1) throw std::invalid_argument("item: tensor is not a scalar, shape " + shape_str(shape()));
    return n_->data[0];
  }

  void zero_grad() {
    if (n_) n_->grad.assign(n_->data.size(), T(0));
  }

  Node* node() const { return n_.get(); }

  // Reverse-mode sweep from a scalar. Topological order comes from a
  // depth-first walk with parents visited in construction order, so the
  // accumulation order is the same on every run.
  void backward() const {
    if (numel() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(shape()));
    if (!n_->requires_grad)
      throw std::invalid_argument("backward: loss does not require grad");

    std::vector<Node*> topo;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.push_back({n_.get(), 0});
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [nd, next] = stack.back();
      if (next < nd->parents.size()) {
        Node* p = nd->parents[next].node();
        ++next;
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        topo.push_back(nd);
        stack.pop_back();
      }
    }

    n_->ensure_grad();
    n_->grad[0] += T(1);
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
      Node* nd = *it;
      if (nd->backward_fn) nd->backward_fn(*nd);
    }
  }

  // Internal: wire up an op result. Parents that do not require grad are
  // still recorded so backward_fn can read their values.
  static Tensor make_op(Shape shape, std::vector<T> data, std::vector<Tensor> parents,
                        std::function<void(Node&)> backward_fn) {
    bool rg = false;
    if (grad_mode())
      for (const auto& p : parents) rg = rg || p.requires_grad();
    Tensor t = from_data(std::move(data), std::move(shape), rg);
    if (rg) {
      t.n_->parents = std::move(parents);
      t.n_->backward_fn = std::move(backward_fn);
    }
    return t;
  }

 private:
  std::shared_ptr<Node> n_;
};

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<T> out(a.numel());
  const auto &da = a.data(), &db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [](auto& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    if (pa.requires_grad()) {
      pa.node()->ensure_grad();
      for (std::size_t i = 0; i < nd.grad.size(); ++i) pa.grad()[i] += nd.grad[i];
    }
    if (pb.requires_grad()) {
      pb.node()->ensure_grad();
      for (std::size_t i = 0; i < nd.grad.size(); ++i) pb.grad()[i] += nd.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<T> out(a.numel());
  const auto &da = a.data(), &db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] - db[i];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [](auto& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    if (pa.requires_grad()) {
      pa.node()->ensure_grad();
      for (std::size_t i = 0; i < nd.grad.size(); ++i) pa.grad()[i] += nd.grad[i];
    }
    if (pb.requires_grad()) {
      pb.node()->ensure_grad();
      for (std::size_t i = 0; i < nd.grad.size(); ++i) pb.grad()[i] -= nd.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a, b, "mul");
  std::vector<T> out(a.numel());
  const auto &da = a.data(), &db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * db[i];
  return Tensor<T>::make_op(a.shape(), std::move(out), {a, b}, [](auto& nd) {
    auto& pa = nd.parents[0];
    auto& pb = nd.parents[1];
    if (pa.requires_grad()) {
      pa.node()->ensure_grad();
      for (std::size_t i = 0; i < nd.grad.size(); ++i) pa.grad()[i] += nd.grad[i] * pb.data()[i];
    }
    if (pb.requires_grad()) {
      pb.node()->ensure_grad();
      for (std::size_t i = 0; i < nd.grad.size(); ++i) pb.grad()[i] += nd.grad[i] * pa.data()[i];
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] * c;
  return Tensor<T>::make_op(a.shape(), std::move(out), {a}, [c](auto& nd) {
    auto& pa = nd.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    for (std::size_t i = 0; i < nd.grad.size(); ++i) pa.grad()[i] += nd.grad[i] * c;
  });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  std::vector<T> out(a.numel());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + c;
  return Tensor<T>::make_op(a.shape(), std::move(out), {a}, [](auto& nd) {
    auto& pa = nd.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    for (std::size_t i = 0; i < nd.grad.size(); ++i) pa.grad()[i] += nd.grad[i];
  });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] > T(0) ? da[i] : T(0);
  return Tensor<T>::make_op(a.shape(), std::move(out), {a}, [](auto& nd) {
    auto& pa = nd.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    for (std::size_t i = 0; i < nd.grad.size(); ++i)
      if (pa.data()[i] > T(0)) pa.grad()[i] += nd.grad[i];
  });
}

// Exact erf form; smooth, which keeps finite differences clean.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto& da = a.data();
  const T inv_sqrt2 = T(0.7071067811865475244);
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = T(0.5) * da[i] * (T(1) + std::erf(da[i] * inv_sqrt2));
  return Tensor<T>::make_op(a.shape(), std::move(out), {a}, [inv_sqrt2](auto& nd) {
    auto& pa = nd.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    const T inv_sqrt2pi = T(0.3989422804014326779);
    for (std::size_t i = 0; i < nd.grad.size(); ++i) {
      const T x = pa.data()[i];
      const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
      const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * x * x);
      pa.grad()[i] += nd.grad[i] * (cdf + x * pdf);
    }
  });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const T x = da[i];
    out[i] = x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
  }
  return Tensor<T>::make_op(a.shape(), std::move(out), {a}, [](auto& nd) {
    auto& pa = nd.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    for (std::size_t i = 0; i < nd.grad.size(); ++i) {
      const T s = nd.data[i];
      pa.grad()[i] += nd.grad[i] * s * (T(1) - s);
    }
  });
}

// log with the argument floored at 1e-12; the clamped region is flat.
template <typename T>
Tensor<T> log_clamped(const Tensor<T>& a) {
  constexpr T kFloor = T(1e-12);
  std::vector<T> out(a.numel());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(da[i], kFloor));
  return Tensor<T>::make_op(a.shape(), std::move(out), {a}, [](auto& nd) {
    auto& pa = nd.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    for (std::size_t i = 0; i < nd.grad.size(); ++i)
      if (pa.data()[i] > T(1e-12)) pa.grad()[i] += nd.grad[i] / pa.data()[i];
  });
}

template <typename T>
Tensor<T> pow_scalar(const Tensor<T>& a, T e) {
  std::vector<T> out(a.numel());
  const auto& da = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::pow(da[i], e);
  return Tensor<T>::make_op(a.shape(), std::move(out), {a}, [e](auto& nd) {
    auto& pa = nd.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    for (std::size_t i = 0; i < nd.grad.size(); ++i) {
      const T x = pa.data()[i];
      const T d = e * std::pow(x, e - T(1));
      if (std::isfinite(d)) pa.grad()[i] += nd.grad[i] * d;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (const T v : a.data()) acc += v;
  return Tensor<T>::make_op({1}, {acc}, {a}, [](auto& nd) {
    auto& pa = nd.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    for (auto& g : pa.grad()) g += nd.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  T acc = T(0);
  for (const T v : a.data()) acc += v;
  acc *= inv;
  return Tensor<T>::make_op({1}, {acc}, {a}, [inv](auto& nd) {
    auto& pa = nd.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    for (auto& g : pa.grad()) g += nd.grad[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// softmax along an arbitrary axis, stabilized by max subtraction.

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const int nd = static_cast<int>(a.ndim());
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd)
    throw std::invalid_argument("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                                shape_str(a.shape()));
  const std::size_t n = a.dim(axis);
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);

  std::vector<T> out(a.numel());
  const auto& da = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      T mx = da[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, da[base + k * inner]);
      T denom = T(0);
      for (std::size_t k = 0; k < n; ++k) {
        const T e = std::exp(da[base + k * inner] - mx);
        out[base + k * inner] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] *= inv;
    }
  }
  return Tensor<T>::make_op(a.shape(), std::move(out), {a}, [n, outer, inner](auto& nd2) {
    auto& pa = nd2.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        T dot = T(0);
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t idx = base + k * inner;
          dot += nd2.grad[idx] * nd2.data[idx];
        }
        for (std::size_t k = 0; k < n; ++k) {
          const std::size_t idx = base + k * inner;
          pa.grad()[idx] += nd2.data[idx] * (nd2.grad[idx] - dot);
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// layer_norm over the last dimension, eps = 1e-5, then affine.

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias) {
  if (x.ndim() < 1) throw std::invalid_argument("layer_norm: rank-0 input");
  const std::size_t D = x.dim(x.ndim() - 1);
  if (gain.numel() != D || bias.numel() != D)
    throw std::invalid_argument("layer_norm: gain/bias length must be " + std::to_string(D));
  const std::size_t rows = x.numel() / D;
  constexpr T kEps = T(1e-5);

  std::vector<T> out(x.numel());
  std::vector<T> xhat(x.numel());
  std::vector<T> inv_std(rows);
  const auto& dx = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t base = r * D;
    T m = T(0);
    for (std::size_t j = 0; j < D; ++j) m += dx[base + j];
    m /= static_cast<T>(D);
    T var = T(0);
    for (std::size_t j = 0; j < D; ++j) {
      const T d = dx[base + j] - m;
      var += d * d;
    }
    var /= static_cast<T>(D);
    const T is = T(1) / std::sqrt(var + kEps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < D; ++j) {
      const T h = (dx[base + j] - m) * is;
      xhat[base + j] = h;
      out[base + j] = gain.data()[j] * h + bias.data()[j];
    }
  }

  auto xhat_p = std::make_shared<std::vector<T>>(std::move(xhat));
  auto inv_std_p = std::make_shared<std::vector<T>>(std::move(inv_std));
  return Tensor<T>::make_op(
      x.shape(), std::move(out), {x, gain, bias}, [D, rows, xhat_p, inv_std_p](auto& nd) {
        auto& px = nd.parents[0];
        auto& pg = nd.parents[1];
        auto& pb = nd.parents[2];
        const auto& xh = *xhat_p;
        if (pg.requires_grad()) {
          pg.node()->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < D; ++j)
              pg.grad()[j] += nd.grad[r * D + j] * xh[r * D + j];
        }
        if (pb.requires_grad()) {
          pb.node()->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < D; ++j) pb.grad()[j] += nd.grad[r * D + j];
        }
        if (px.requires_grad()) {
          px.node()->ensure_grad();
          for (std::size_t r = 0; r < rows; ++r) {
            const std::size_t base = r * D;
            T s1 = T(0), s2 = T(0);
            for (std::size_t j = 0; j < D; ++j) {
              const T gy = nd.grad[base + j] * pg.data()[j];
              s1 += gy;
              s2 += gy * xh[base + j];
            }
            s1 /= static_cast<T>(D);
            s2 /= static_cast<T>(D);
            for (std::size_t j = 0; j < D; ++j) {
              const T gy = nd.grad[base + j] * pg.data()[j];
              px.grad()[base + j] += (gy - s1 - xh[base + j] * s2) * (*inv_std_p)[r];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// matmul for 2-D tensors. Inner loops run over the contiguous output
// column index; rows are split across worker threads.

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data();
  parallel_for(m, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i)
      for (std::size_t kk = 0; kk < k; ++kk) {
        const T av = pa[i * k + kk];
        const T* brow = pb + kk * n;
        T* orow = po + i * n;
        for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
  }, 16384 / std::max<std::size_t>(1, n));

  return Tensor<T>::make_op({m, n}, std::move(out), {a, b}, [m, k, n](auto& nd) {
    auto& A = nd.parents[0];
    auto& B = nd.parents[1];
    const T* g = nd.grad.data();
    if (A.requires_grad()) {
      A.node()->ensure_grad();
      // dA = dC * B^T as unit-stride row dot products
      T* ga = A.grad().data();
      const T* db = B.data().data();
      parallel_for(m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
          const T* grow = g + i * n;
          T* garow = ga + i * k;
          for (std::size_t kk = 0; kk < k; ++kk) {
            const T* brow = db + kk * n;
            T acc = T(0);
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            garow[kk] += acc;
          }
        }
      }, 16384 / std::max<std::size_t>(1, n));
    }
    if (B.requires_grad()) {
      B.node()->ensure_grad();
      T* gb = B.grad().data();
      const T* da = A.data().data();
      parallel_for(k, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t kk = lo; kk < hi; ++kk)
          for (std::size_t i = 0; i < m; ++i) {
            const T av = da[i * k + kk];
            const T* grow = g + i * n;
            T* gbrow = gb + kk * n;
            for (std::size_t j = 0; j < n; ++j) gbrow[j] += av * grow[j];
          }
      }, 16384 / std::max<std::size_t>(1, n));
      // dB = A^T * dC
    }
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw std::invalid_argument("reshape: cannot view " + shape_str(a.shape()) + " as " +
                                shape_str(shape));
  std::vector<T> out = a.data();
  return Tensor<T>::make_op(std::move(shape), std::move(out), {a}, [](auto& nd) {
    auto& pa = nd.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    for (std::size_t i = 0; i < nd.grad.size(); ++i) pa.grad()[i] += nd.grad[i];
  });
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose2d: need rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  const auto& da = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = da[i * n + j];
  return Tensor<T>::make_op({n, m}, std::move(out), {a}, [m, n](auto& nd) {
    auto& pa = nd.parents[0];
    if (!pa.requires_grad()) return;
    pa.node()->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa.grad()[i * n + j] += nd.grad[j * m + i];
  });
}

// Concatenate 2-D tensors along axis 0 (rows) or 1 (columns).
template <typename T>
Tensor<T> concat2d(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat2d: no inputs");
  if (axis != 0 && axis != 1) throw std::invalid_argument("concat2d: axis must be 0 or 1");
  const std::size_t fixed = parts[0].dim(axis == 0 ? 1 : 0);
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(axis == 0 ? 1 : 0) != fixed)
      throw std::invalid_argument("concat2d: mismatched shapes");
    total += p.dim(axis);
  }
  const std::size_t rows = axis == 0 ? total : fixed;
  const std::size_t cols = axis == 0 ? fixed : total;
  std::vector<T> out(rows * cols);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const auto& dp = p.data();
    if (axis == 0) {
      std::copy(dp.begin(), dp.end(), out.begin() + offset * cols);
      offset += p.dim(0);
    } else {
      const std::size_t pc = p.dim(1);
      for (std::size_t i = 0; i < rows; ++i)
        std::copy(dp.begin() + i * pc, dp.begin() + (i + 1) * pc, out.begin() + i * cols + offset);
      offset += pc;
    }
  }
  std::vector<Tensor<T>> parents(parts.begin(), parts.end());
  return Tensor<T>::make_op({rows, cols}, std::move(out), std::move(parents),
                            [axis, rows, cols](auto& nd) {
                              std::size_t offset = 0;
                              for (auto& p : nd.parents) {
                                const std::size_t pr = p.dim(0), pc = p.dim(1);
                                if (p.requires_grad()) {
                                  p.node()->ensure_grad();
                                  if (axis == 0) {
                                    for (std::size_t i = 0; i < pr * pc; ++i)
                                      p.grad()[i] += nd.grad[offset * cols + i];
                                  } else {
                                    for (std::size_t i = 0; i < rows; ++i)
                                      for (std::size_t j = 0; j < pc; ++j)
                                        p.grad()[i * pc + j] += nd.grad[i * cols + offset + j];
                                  }
                                }
                                offset += (axis == 0) ? pr : pc;
                              }
                            });
}

// Broadcast a length-D vector across the rows of an L x D matrix.
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.ndim() != 2 || v.numel() != x.dim(1))
    throw std::invalid_argument("add_rowvec: shapes " + shape_str(x.shape()) + " and " +
                                shape_str(v.shape()));
  const std::size_t L = x.dim(0), D = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < D; ++j) out[i * D + j] = x.data()[i * D + j] + v.data()[j];
  return Tensor<T>::make_op(x.shape(), std::move(out), {x, v}, [L, D](auto& nd) {
    auto& px = nd.parents[0];
    auto& pv = nd.parents[1];
    if (px.requires_grad()) {
      px.node()->ensure_grad();
      for (std::size_t i = 0; i < L * D; ++i) px.grad()[i] += nd.grad[i];
    }
    if (pv.requires_grad()) {
      pv.node()->ensure_grad();
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < D; ++j) pv.grad()[j] += nd.grad[i * D + j];
    }
  });
}

template <typename T>
Tensor<T> sub_rowvec(const Tensor<T>& x, const Tensor<T>& v) {
  if (x.ndim() != 2 || v.numel() != x.dim(1))
    throw std::invalid_argument("sub_rowvec: shapes " + shape_str(x.shape()) + " and " +
                                shape_str(v.shape()));
  const std::size_t L = x.dim(0), D = x.dim(1);
  std::vector<T> out(x.numel());
  for (std::size_t i = 0; i < L; ++i)
    for (std::size_t j = 0; j < D; ++j) out[i * D + j] = x.data()[i * D + j] - v.data()[j];
  return Tensor<T>::make_op(x.shape(), std::move(out), {x, v}, [L, D](auto& nd) {
    auto& px = nd.parents[0];
    auto& pv = nd.parents[1];
    if (px.requires_grad()) {
      px.node()->ensure_grad();
      for (std::size_t i = 0; i < L * D; ++i) px.grad()[i] += nd.grad[i];
    }
    if (pv.requires_grad()) {
      pv.node()->ensure_grad();
      for (std::size_t i = 0; i < L; ++i)
        for (std::size_t j = 0; j < D; ++j) pv.grad()[j] -= nd.grad[i * D + j];
    }
  });
}

// Row-wise L2 normalization with the norm clamped at eps.
template <typename T>
Tensor<T> l2_normalize_rows(const Tensor<T>& x, T eps = T(1e-6)) {
  if (x.ndim() != 2) throw std::invalid_argument("l2_normalize_rows: need rank 2");
  const std::size_t L = x.dim(0), D = x.dim(1);
  std::vector<T> out(x.numel());
  std::vector<T> norms(L);
  for (std::size_t i = 0; i < L; ++i) {
    T s = T(0);
    for (std::size_t j = 0; j < D; ++j) {
      const T v = x.data()[i * D + j];
      s += v * v;
    }
    const T n = std::max(std::sqrt(s), eps);
    norms[i] = n;
    for (std::size_t j = 0; j < D; ++j) out[i * D + j] = x.data()[i * D + j] / n;
  }
  auto norms_p = std::make_shared<std::vector<T>>(std::move(norms));
  return Tensor<T>::make_op(x.shape(), std::move(out), {x}, [L, D, eps, norms_p](auto& nd) {
    auto& px = nd.parents[0];
    if (!px.requires_grad()) return;
    px.node()->ensure_grad();
    for (std::size_t i = 0; i < L; ++i) {
      const T n = (*norms_p)[i];
      const std::size_t base = i * D;
      if (n > eps) {
        T dot = T(0);
        for (std::size_t j = 0; j < D; ++j) dot += nd.grad[base + j] * nd.data[base + j];
        for (std::size_t j = 0; j < D; ++j)
          px.grad()[base + j] += (nd.grad[base + j] - nd.data[base + j] * dot) / n;
      } else {
        for (std::size_t j = 0; j < D; ++j) px.grad()[base + j] += nd.grad[base + j] / n;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation with zero padding on a C x H x W input.
// Lowered to a matmul over im2col patches; the patch matrix is kept for
// the backward pass.

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias, int stride,
                 int pad) {
  if (x.ndim() != 3 || w.ndim() != 4)
    throw std::invalid_argument("conv2d: need CxHxW input and OxCxKhxKw kernel, got " +
                                shape_str(x.shape()) + " and " + shape_str(w.shape()));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C)
    throw std::invalid_argument("conv2d: kernel channels " + std::to_string(w.dim(1)) +
                                " != input channels " + std::to_string(C));
  if (kh > H + 2 * pad || kw > W + 2 * pad)
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                " larger than padded input");
  if (bias.defined() && bias.numel() != O)
    throw std::invalid_argument("conv2d: bias length must equal output channels");

  const std::size_t Ho = (H + 2 * pad - kh) / stride + 1;
  const std::size_t Wo = (W + 2 * pad - kw) / stride + 1;
  const std::size_t K = C * kh * kw;
  const std::size_t Lout = Ho * Wo;

  auto patches = std::make_shared<std::vector<T>>(K * Lout, T(0));
  {
    const T* px = x.data().data();
    T* pp = patches->data();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t ky = 0; ky < kh; ++ky)
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const std::size_t row = (c * kh + ky) * kw + kx;
          for (std::size_t oy = 0; oy < Ho; ++oy) {
            const long iy = static_cast<long>(oy) * stride + static_cast<long>(ky) - pad;
            if (iy < 0 || iy >= static_cast<long>(H)) continue;
            for (std::size_t ox = 0; ox < Wo; ++ox) {
              const long ix = static_cast<long>(ox) * stride + static_cast<long>(kx) - pad;
              if (ix < 0 || ix >= static_cast<long>(W)) continue;
              pp[row * Lout + oy * Wo + ox] = px[(c * H + iy) * W + ix];
            }
          }
        }
  }

  std::vector<T> out(O * Lout, T(0));
  {
    const T* pw = w.data().data();
    const T* pp = patches->data();
    T* po = out.data();
    parallel_for(O, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t o = lo; o < hi; ++o) {
        for (std::size_t kk = 0; kk < K; ++kk) {
          const T wv = pw[o * K + kk];
          const T* prow = pp + kk * Lout;
          T* orow = po + o * Lout;
          for (std::size_t l = 0; l < Lout; ++l) orow[l] += wv * prow[l];
        }
        if (bias.defined()) {
          const T bv = bias.data()[o];
          T* orow = po + o * Lout;
          for (std::size_t l = 0; l < Lout; ++l) orow[l] += bv;
        }
      }
    }, 8192 / std::max<std::size_t>(1, Lout));
  }

  std::vector<Tensor<T>> parents = bias.defined() ? std::vector<Tensor<T>>{x, w, bias}
                                                  : std::vector<Tensor<T>>{x, w};
  return Tensor<T>::make_op(
      {O, Ho, Wo}, std::move(out), std::move(parents),
      [C, H, W, O, kh, kw, stride, pad, Ho, Wo, K, Lout, patches](auto& nd) {
        auto& px = nd.parents[0];
        auto& pw = nd.parents[1];
        const T* g = nd.grad.data();
        if (pw.requires_grad()) {
          pw.node()->ensure_grad();
          T* gw = pw.grad().data();
          const T* pp = patches->data();
          parallel_for(O, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t o = lo; o < hi; ++o)
              for (std::size_t kk = 0; kk < K; ++kk) {
                const T* grow = g + o * Lout;
                const T* prow = pp + kk * Lout;
                T acc = T(0);
                for (std::size_t l = 0; l < Lout; ++l) acc += grow[l] * prow[l];
                gw[o * K + kk] += acc;
              }
          }, 4096 / std::max<std::size_t>(1, Lout));
        }
        if (nd.parents.size() == 3 && nd.parents[2].requires_grad()) {
          auto& pb = nd.parents[2];
          pb.node()->ensure_grad();
          for (std::size_t o = 0; o < O; ++o) {
            T acc = T(0);
            for (std::size_t l = 0; l < Lout; ++l) acc += g[o * Lout + l];
            pb.grad()[o] += acc;
          }
        }
        if (px.requires_grad()) {
          px.node()->ensure_grad();
          // dPatches = W^T * dOut, scattered back through the im2col map.
          // Each input channel owns a disjoint slice of dx, so the scatter
          // parallelizes over channels.
          std::vector<T> gpatches(K * Lout, T(0));
          const T* pwd = pw.data().data();
          parallel_for(K, [&](std::size_t lo, std::size_t hi) {
            for (std::size_t kk = lo; kk < hi; ++kk) {
              T* prow = gpatches.data() + kk * Lout;
              for (std::size_t o = 0; o < O; ++o) {
                const T wv = pwd[o * K + kk];
                const T* grow = g + o * Lout;
                for (std::size_t l = 0; l < Lout; ++l) prow[l] += wv * grow[l];
              }
            }
          }, 4096 / std::max<std::size_t>(1, Lout));
          T* gx = px.grad().data();
          parallel_for(C, [&](std::size_t clo, std::size_t chi) {
            for (std::size_t c = clo; c < chi; ++c)
              for (std::size_t ky = 0; ky < kh; ++ky)
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const std::size_t row = (c * kh + ky) * kw + kx;
                  for (std::size_t oy = 0; oy < Ho; ++oy) {
                    const long iy = static_cast<long>(oy) * stride + static_cast<long>(ky) - pad;
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                      const long ix = static_cast<long>(ox) * stride + static_cast<long>(kx) - pad;
                      if (ix < 0 || ix >= static_cast<long>(W)) continue;
                      gx[(c * H + iy) * W + ix] += gpatches[row * Lout + oy * Wo + ox];
                    }
                  }
                }
          }, 1);
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  return conv2d(x, w, Tensor<T>{}, stride, pad);
}

// ---------------------------------------------------------------------------
// bilinear_upsample2x: C x H x W -> C x 2H x 2W, align_corners = false.

template <typename T>
Tensor<T> bilinear_upsample2x(const Tensor<T>& x) {
  if (x.ndim() != 3) throw std::invalid_argument("bilinear_upsample2x: need CxHxW input");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const std::size_t Ho = 2 * H, Wo = 2 * W;

  // Precompute the 1-D source taps: src = (dst + 0.5)/2 - 0.5, clamped.
  struct Tap {
    std::size_t i0, i1;
    T w1;
  };
  auto make_taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> taps(out);
    for (std::size_t d = 0; d < out; ++d) {
      const double s = (static_cast<double>(d) + 0.5) / 2.0 - 0.5;
      double f = std::floor(s);
      double frac = s - f;
      long i0 = static_cast<long>(f);
      long i1 = i0 + 1;
      if (i0 < 0) { i0 = 0; i1 = 0; frac = 0.0; }
      if (i1 >= static_cast<long>(in)) { i1 = static_cast<long>(in) - 1; i0 = i1; frac = 0.0; }
      taps[d] = {static_cast<std::size_t>(i0), static_cast<std::size_t>(i1), static_cast<T>(frac)};
    }
    return taps;
  };
  auto ytaps = std::make_shared<std::vector<Tap>>(make_taps(H, Ho));
  auto xtaps = std::make_shared<std::vector<Tap>>(make_taps(W, Wo));

  std::vector<T> out(C * Ho * Wo);
  const T* px = x.data().data();
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t oy = 0; oy < Ho; ++oy) {
      const Tap ty = (*ytaps)[oy];
      for (std::size_t ox = 0; ox < Wo; ++ox) {
        const Tap tx = (*xtaps)[ox];
        const T v00 = px[(c * H + ty.i0) * W + tx.i0];
        const T v01 = px[(c * H + ty.i0) * W + tx.i1];
        const T v10 = px[(c * H + ty.i1) * W + tx.i0];
        const T v11 = px[(c * H + ty.i1) * W + tx.i1];
        const T top = v00 + (v01 - v00) * tx.w1;
        const T bot = v10 + (v11 - v10) * tx.w1;
        out[(c * Ho + oy) * Wo + ox] = top + (bot - top) * ty.w1;
      }
    }

  return Tensor<T>::make_op({C, Ho, Wo}, std::move(out), {x},
                            [C, H, W, Ho, Wo, ytaps, xtaps](auto& nd) {
                              auto& px = nd.parents[0];
                              if (!px.requires_grad()) return;
                              px.node()->ensure_grad();
                              T* gx = px.grad().data();
                              for (std::size_t c = 0; c < C; ++c)
                                for (std::size_t oy = 0; oy < Ho; ++oy) {
                                  const Tap ty = (*ytaps)[oy];
                                  for (std::size_t ox = 0; ox < Wo; ++ox) {
                                    const Tap tx = (*xtaps)[ox];
                                    const T gv = nd.grad[(c * Ho + oy) * Wo + ox];
                                    const T wy1 = ty.w1, wx1 = tx.w1;
                                    gx[(c * H + ty.i0) * W + tx.i0] += gv * (1 - wy1) * (1 - wx1);
                                    gx[(c * H + ty.i0) * W + tx.i1] += gv * (1 - wy1) * wx1;
                                    gx[(c * H + ty.i1) * W + tx.i0] += gv * wy1 * (1 - wx1);
                                    gx[(c * H + ty.i1) * W + tx.i1] += gv * wy1 * wx1;
                                  }
                                }
                            });
}

// Center crop of a C x H x W tensor.
template <typename T>
Tensor<T> center_crop(const Tensor<T>& x, std::size_t oh, std::size_t ow) {
  if (x.ndim() != 3) throw std::invalid_argument("center_crop: need CxHxW input");
  const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (oh > H || ow > W)
    throw std::invalid_argument("center_crop: target " + std::to_string(oh) + "x" +
                                std::to_string(ow) + " exceeds input " + shape_str(x.shape()));
  const std::size_t y0 = (H - oh) / 2, x0 = (W - ow) / 2;
  std::vector<T> out(C * oh * ow);
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xx = 0; xx < ow; ++xx)
        out[(c * oh + y) * ow + xx] = x.data()[(c * H + y0 + y) * W + x0 + xx];
  return Tensor<T>::make_op({C, oh, ow}, std::move(out), {x}, [C, H, W, oh, ow, y0, x0](auto& nd) {
    auto& px = nd.parents[0];
    if (!px.requires_grad()) return;
    px.node()->ensure_grad();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xx = 0; xx < ow; ++xx)
          px.grad()[(c * H + y0 + y) * W + x0 + xx] += nd.grad[(c * oh + y) * ow + xx];
  });
}

}  // namespace cvt
