# Exporters package
