# Parameter and multiply-accumulate counts for the two presets at 1280x720 output.
from repdistill.network import ModelConfig, build_model
from repdistill.profile import cost_report, count_madds, count_params

full = build_model(ModelConfig(scale=4))
rep = cost_report(full, 720, 1280)
print(rep.to_text().splitlines()[-1])

# training-time branches inflate the parameter count; fusion removes them again
print("training params:", count_params(full, "training"))
print("inference params:", count_params(full, "inference"))

# effect of the dynamic latent size L
for L in (0, 8, 16, 24):
    m = build_model(ModelConfig(scale=4, latent=L))
    dense = count_madds(m, 720, 1280)
    fact = count_madds(m, 720, 1280, dynamic="factorized")
    print("L=%2d  params=%7d  MAdds dense=%.2fG factorized=%.2fG" % (L, count_params(m), dense / 1e9, fact / 1e9))

small = build_model(ModelConfig(scale=2, variant="s"))
print("S x2 params:", count_params(small))
